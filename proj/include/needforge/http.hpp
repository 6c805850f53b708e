#pragma once

#include <chrono>
#include <functional>
#include <string>

namespace needforge {

struct HttpResponse {
    int status = 0;  // 0 when the request never completed
    std::string body;
};

/// POSTs `body` (JSON) to `path` below the base URL with the given bearer token.
using HttpPost = std::function<HttpResponse(const std::string& path, const std::string& body,
                                            const std::string& bearer)>;

/// httplib-backed transport for http:// (and https:// when built with OpenSSL).
HttpPost make_http_transport(const std::string& base_url, std::chrono::seconds timeout = std::chrono::seconds(60));

}  // namespace needforge
