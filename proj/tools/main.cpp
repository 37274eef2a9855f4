#include "cli_commands.hpp"

int main(int argc, char** argv) { return streamconv_cli::run_cli(argc, argv); }
