#include "needforge/cli.hpp"

int main(int argc, char** argv) { return needforge::cli::run(argc, argv); }
