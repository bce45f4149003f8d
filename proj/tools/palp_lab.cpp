#include "palp/cli/app.hpp"

int main(int argc, char** argv) { return palp::cli::run(argc, argv); }
