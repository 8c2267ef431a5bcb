#pragma once

#include "gefs/random.hpp"
#include "gefs/error.hpp"
#include "gefs/dataset.hpp"
#include "gefs/forest.hpp"
#include "gefs/circuit.hpp"
#include "gefs/robustness.hpp"
#include "gefs/evaluation.hpp"
#include "gefs/model_io.hpp"
#include "gefs/cli.hpp"
