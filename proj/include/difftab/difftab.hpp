#pragma once

// Umbrella header for the library.  The command-line layer lives in
// difftab/cli.hpp and is not pulled in here, so library consumers do not
// inherit its argument-parsing dependency.

#include "difftab/anderson.hpp"
#include "difftab/autodiff.hpp"
#include "difftab/checkpoint.hpp"
#include "difftab/config.hpp"
#include "difftab/dataset.hpp"
#include "difftab/denoiser.hpp"
#include "difftab/errors.hpp"
#include "difftab/guidance.hpp"
#include "difftab/metrics.hpp"
#include "difftab/rng.hpp"
#include "difftab/sampler.hpp"
#include "difftab/schedule.hpp"
#include "difftab/tensor.hpp"
#include "difftab/trainer.hpp"
