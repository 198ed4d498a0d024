#include "celeste/cli.hpp"

int main(int argc, char** argv) { return celeste::run_command(argc, argv); }
