#include "revq/cli.hpp"

int main(int argc, char** argv) { return revq::cli::run(argc, argv).exit_code; }
