#pragma once

#include "tefn/config.hpp"
#include "tefn/data.hpp"
#include "tefn/evidence.hpp"
#include "tefn/experiments.hpp"
#include "tefn/model.hpp"
#include "tefn/rng.hpp"
#include "tefn/tensor.hpp"
#include "tefn/training.hpp"
