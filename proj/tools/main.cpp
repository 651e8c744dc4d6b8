#include "miadapt/cli.hpp"

int main(int argc, char** argv) { return miadapt::cli::run(argc, argv); }
