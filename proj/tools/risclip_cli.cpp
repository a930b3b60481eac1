#include "risclip/cli.hpp"

int main(int argc, char** argv) { return risclip::run_cli(argc, argv); }
