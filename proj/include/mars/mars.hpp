#pragma once

#include "mars/core.hpp"
#include "mars/dataset.hpp"
#include "mars/evaluator.hpp"
#include "mars/model.hpp"
#include "mars/objective.hpp"
#include "mars/optim.hpp"
#include "mars/trainer.hpp"
