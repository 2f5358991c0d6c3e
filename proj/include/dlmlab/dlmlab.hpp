#pragma once

// Core library. The JSON-driven experiment harness lives in
// dlmlab/experiment.hpp and additionally needs nlohmann/json.

#include "dlmlab/errors.hpp"
#include "dlmlab/rng.hpp"
#include "dlmlab/linalg.hpp"
#include "dlmlab/model.hpp"
#include "dlmlab/gradients.hpp"
#include "dlmlab/data.hpp"
#include "dlmlab/parallel.hpp"
#include "dlmlab/diagnostics.hpp"
#include "dlmlab/optimize.hpp"
