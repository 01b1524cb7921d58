#pragma once

#include "hdp/numcore/adamw.hpp"
#include "hdp/numcore/checkpoint.hpp"
#include "hdp/numcore/gradcheck.hpp"
#include "hdp/numcore/graph.hpp"
#include "hdp/numcore/ops.hpp"
#include "hdp/numcore/params.hpp"
#include "hdp/numcore/tensor.hpp"
