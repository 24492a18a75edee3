#pragma once

#include "nufe/quadrature.hpp"
#include "nufe/rng.hpp"
#include "nufe/model.hpp"
#include "nufe/nelder_mead.hpp"
#include "nufe/population.hpp"
#include "nufe/asymptotics.hpp"
#include "nufe/bayes.hpp"
#include "nufe/harness.hpp"
