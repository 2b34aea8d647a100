#pragma once

#include "hprompt/backbone.hpp"
#include "hprompt/config.hpp"
#include "hprompt/data.hpp"
#include "hprompt/gradcheck.hpp"
#include "hprompt/inference.hpp"
#include "hprompt/kmeans.hpp"
#include "hprompt/losses.hpp"
#include "hprompt/metrics.hpp"
#include "hprompt/optim.hpp"
#include "hprompt/prompts.hpp"
#include "hprompt/rng.hpp"
#include "hprompt/serialize.hpp"
#include "hprompt/tensor.hpp"
#include "hprompt/trainer.hpp"
