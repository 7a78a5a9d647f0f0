#pragma once

#include "switchbench/bench.hpp"
#include "switchbench/classify.hpp"
#include "switchbench/dataset.hpp"
#include "switchbench/errors.hpp"
#include "switchbench/eval.hpp"
#include "switchbench/gaussian.hpp"
#include "switchbench/lds.hpp"
#include "switchbench/lstm.hpp"
#include "switchbench/model_io.hpp"
#include "switchbench/parallel.hpp"
#include "switchbench/slds.hpp"
