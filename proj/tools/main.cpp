#include "mone/cli.hpp"

int main(int argc, char** argv)
{
    return mone::cli_main(argc, argv);
}
