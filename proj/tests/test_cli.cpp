#include <catch2/catch_amalgamated.hpp>
#include "slcd/slcd.hpp"
