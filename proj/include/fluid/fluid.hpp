#pragma once

#include "fluid/tensor.hpp"
#include "fluid/autograd.hpp"
#include "fluid/ops.hpp"
#include "fluid/nn.hpp"
#include "fluid/sparse_curation.hpp"
#include "fluid/lan.hpp"
#include "fluid/hyper_connections.hpp"
#include "fluid/model.hpp"
#include "fluid/baselines.hpp"
#include "fluid/verify.hpp"
#include "fluid/train.hpp"
#include "fluid/data.hpp"
#include "fluid/tasks.hpp"
#include "fluid/bench.hpp"
