#include "commands.hpp"

int main(int argc, char** argv) { return simvae::cli::run(argc, argv); }
