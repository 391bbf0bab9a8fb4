#include "npcl/cli.hpp"

int main(int argc, char** argv) { return npcl::cli::run(argc, argv); }
