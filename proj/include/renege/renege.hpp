#pragma once

#include "dists.hpp"
#include "errors.hpp"
#include "fluid.hpp"
#include "harness.hpp"
#include "measures.hpp"
#include "rng.hpp"
#include "simulator.hpp"
