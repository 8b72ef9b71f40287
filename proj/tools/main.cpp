#include "fdn/cli.hpp"

int main(int argc, char** argv)
{
    return fdn::cli::run(argc, argv);
}
