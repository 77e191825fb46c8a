#pragma once

#include "slcd/numcore.hpp"
#include "slcd/reward.hpp"
#include "slcd/diffusion.hpp"
#include "slcd/histmodel.hpp"
#include "slcd/loop.hpp"
#include "slcd/discrete.hpp"
#include "slcd/oracles.hpp"
