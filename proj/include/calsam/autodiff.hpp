#pragma once

// Dense reverse-mode automatic differentiation with graph-over-graph double
// backprop: when backward is asked to create a graph, the gradient
// computation is recorded into the same graph and can be differentiated again.

#include "calsam/autodiff/graph.hpp"
#include "calsam/autodiff/kernels.hpp"
#include "calsam/autodiff/ops.hpp"
#include "calsam/autodiff/tensor.hpp"
