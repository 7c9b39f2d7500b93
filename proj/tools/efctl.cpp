#include "ef/cli.hpp"

int main(int argc, char** argv) { return ef::cli::cli_main(argc, argv); }
