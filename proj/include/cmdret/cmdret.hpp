#pragma once

#include "cmdret/checkpoint.hpp"
#include "cmdret/dataio/dataset.hpp"
#include "cmdret/dataio/feature_file.hpp"
#include "cmdret/dataio/synth.hpp"
#include "cmdret/encoders.hpp"
#include "cmdret/errors.hpp"
#include "cmdret/fusion.hpp"
#include "cmdret/model.hpp"
#include "cmdret/model_config.hpp"
#include "cmdret/numerics/gradcheck.hpp"
#include "cmdret/numerics/ops.hpp"
#include "cmdret/numerics/tape.hpp"
#include "cmdret/numerics/tensor.hpp"
#include "cmdret/objectives.hpp"
#include "cmdret/optim.hpp"
#include "cmdret/params.hpp"
#include "cmdret/retrieval.hpp"
#include "cmdret/rng.hpp"
#include "cmdret/trainer.hpp"
