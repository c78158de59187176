#pragma once

#include "rcmp/bench.hpp"
#include "rcmp/dataset.hpp"
#include "rcmp/hash.hpp"
#include "rcmp/image_set.hpp"
#include "rcmp/metrics.hpp"
#include "rcmp/model.hpp"
#include "rcmp/ops.hpp"
#include "rcmp/pipeline.hpp"
#include "rcmp/pruner.hpp"
#include "rcmp/quant_params.hpp"
#include "rcmp/quantizer.hpp"
#include "rcmp/rng.hpp"
#include "rcmp/serialize.hpp"
#include "rcmp/tape.hpp"
#include "rcmp/tensor.hpp"
#include "rcmp/trainer.hpp"
