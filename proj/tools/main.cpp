#include "rlpf/cli.hpp"

int main(int argc, char** argv) { return rlpf::run_cli(argc, argv); }
