#pragma once

#include "loopmem/checkpoint.hpp"
#include "loopmem/config.hpp"
#include "loopmem/data.hpp"
#include "loopmem/error.hpp"
#include "loopmem/eval.hpp"
#include "loopmem/flops.hpp"
#include "loopmem/grad_check.hpp"
#include "loopmem/graph.hpp"
#include "loopmem/model.hpp"
#include "loopmem/ops.hpp"
#include "loopmem/presets.hpp"
#include "loopmem/reference.hpp"
#include "loopmem/rng.hpp"
#include "loopmem/run_config.hpp"
#include "loopmem/serialize.hpp"
#include "loopmem/tensor.hpp"
#include "loopmem/tokens.hpp"
#include "loopmem/training.hpp"
#include "loopmem/verify.hpp"
