#pragma once

#include "divae/autodiff/adam.hpp"
#include "divae/autodiff/graph.hpp"
#include "divae/autodiff/ops.hpp"
#include "divae/autodiff/tensor.hpp"
