#include "minivla/cli.hpp"

int main(int argc, char** argv) { return minivla::run_cli(argc, argv); }
