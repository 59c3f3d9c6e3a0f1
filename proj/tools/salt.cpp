#include "salt/cli.hpp"

int main(int argc, char** argv) { return salt::dispatch(argc, argv); }
