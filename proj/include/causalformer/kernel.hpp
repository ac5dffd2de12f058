#pragma once

#include "causalformer/kernel/adamw.hpp"
#include "causalformer/kernel/ops.hpp"
#include "causalformer/kernel/param_store.hpp"
#include "causalformer/kernel/rng.hpp"
#include "causalformer/kernel/tape.hpp"
#include "causalformer/kernel/types.hpp"
