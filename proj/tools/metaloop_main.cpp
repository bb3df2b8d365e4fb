#include "metaloop/harness.hpp"

int main(int argc, char** argv) { return metaloop::run_cli(argc, argv); }
