#pragma once

#include "gravprune/checkpoint.hpp"
#include "gravprune/cost.hpp"
#include "gravprune/dataset.hpp"
#include "gravprune/descriptor.hpp"
#include "gravprune/engine.hpp"
#include "gravprune/error.hpp"
#include "gravprune/gravity.hpp"
#include "gravprune/model.hpp"
#include "gravprune/pruning.hpp"
#include "gravprune/rng.hpp"
#include "gravprune/tensor.hpp"
#include "gravprune/training.hpp"
#include "gravprune/config.hpp"
#include "gravprune/pipeline.hpp"
