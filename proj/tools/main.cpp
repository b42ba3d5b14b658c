#include "cli.hpp"

int main(int argc, char** argv) { return pfl::cli::run({argv, argv + argc}); }
