#pragma once

#include "atddpm/cli.hpp"
#include "atddpm/denoiser.hpp"
#include "atddpm/diffusion.hpp"
#include "atddpm/error.hpp"
#include "atddpm/io.hpp"
#include "atddpm/metrics.hpp"
#include "atddpm/rng.hpp"
#include "atddpm/schedule.hpp"
#include "atddpm/tensor.hpp"
#include "atddpm/toyfaces.hpp"
#include "atddpm/trainer.hpp"
#include "atddpm/turbsim.hpp"
