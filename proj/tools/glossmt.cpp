#include "glossmt/cli.hpp"

int main(int argc, char** argv) { return glossmt::run_cli(argc, argv); }
