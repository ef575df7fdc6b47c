#include "rankaudit/cli.hpp"

int main(int argc, char** argv) { return rankaudit::cli::main(argc, argv); }
