#pragma once

#include "edgert/errors.hpp"
#include "edgert/common.hpp"
#include "edgert/ops.hpp"
#include "edgert/artifact.hpp"
#include "edgert/config.hpp"
#include "edgert/shape_sig.hpp"
#include "edgert/kernels.hpp"
#include "edgert/dispatch.hpp"
#include "edgert/autotune.hpp"
#include "edgert/kv_manager.hpp"
#include "edgert/model.hpp"
#include "edgert/step_plan.hpp"
#include "edgert/engine.hpp"
#include "edgert/bench.hpp"
