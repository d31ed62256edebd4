// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "magc/bench.hpp"
#include "magc/engine.hpp"
#include "magc/ledger.hpp"
#include "magc/model.hpp"
#include "magc/planner.hpp"
#include "magc/ssd.hpp"
#include "magc/tensor.hpp"
#include "magc/trainer.hpp"
