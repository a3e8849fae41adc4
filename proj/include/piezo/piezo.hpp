#pragma once

#include "piezo/error.hpp"
#include "piezo/frac_diffusive.hpp"
#include "piezo/beam_model.hpp"
#include "piezo/time_integrator.hpp"
#include "piezo/stability_lab.hpp"
#include "piezo/runner.hpp"
