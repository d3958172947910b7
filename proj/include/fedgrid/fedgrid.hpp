#pragma once

// Umbrella header.

#include "fedgrid/rng.hpp"
#include "fedgrid/nn.hpp"
#include "fedgrid/microgrid.hpp"
#include "fedgrid/ppo.hpp"
#include "fedgrid/codec.hpp"
#include "fedgrid/transport.hpp"
#include "fedgrid/federation.hpp"
#include "fedgrid/scenario.hpp"
#include "fedgrid/harness.hpp"
