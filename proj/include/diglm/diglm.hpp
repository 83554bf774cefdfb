#pragma once

// Umbrella header.

#include "diglm/checkpoint.hpp"
#include "diglm/commands.hpp"
#include "diglm/config.hpp"
#include "diglm/datagen.hpp"
#include "diglm/error.hpp"
#include "diglm/flow.hpp"
#include "diglm/heads.hpp"
#include "diglm/hybrid.hpp"
#include "diglm/numerics.hpp"
#include "diglm/pipeline.hpp"
#include "diglm/random.hpp"
#include "diglm/selective.hpp"
