// httplib is compiled only in this translation unit.
#include <httplib.h>

#include "needforge/domain.hpp"
#include "needforge/http.hpp"

namespace needforge {

HttpPost make_http_transport(const std::string& base_url, std::chrono::seconds timeout) {
    const auto scheme_end = base_url.find("://");
    if (scheme_end == std::string::npos) throw DataError("base url needs a scheme: " + base_url);
    const auto path_start = base_url.find('/', scheme_end + 3);
    const std::string origin = base_url.substr(0, path_start);
    std::string prefix = path_start == std::string::npos ? std::string{} : base_url.substr(path_start);
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
    if (base_url.rfind("https://", 0) == 0) throw DataError("https requires a build with OpenSSL");
#endif
    return [origin, prefix, timeout](const std::string& path, const std::string& body, const std::string& bearer) {
        httplib::Client cli(origin);
        cli.set_connection_timeout(timeout);
        cli.set_read_timeout(timeout);
        cli.set_write_timeout(timeout);
        httplib::Headers headers;
        if (!bearer.empty()) headers.emplace("Authorization", "Bearer " + bearer);
        auto res = cli.Post(prefix + path, headers, body, "application/json");
        if (!res) return HttpResponse{0, httplib::to_string(res.error())};
        return HttpResponse{res->status, res->body};
    };
}

}  // namespace needforge
