#include "cfsl/cli.hpp"

int main(int argc, char** argv) { return cfsl::run_cli(argc, argv); }
