#ifndef STUQ_STUQ_HPP
#define STUQ_STUQ_HPP

#include "stuq/calibrate.hpp"
#include "stuq/common.hpp"
#include "stuq/config.hpp"
#include "stuq/data.hpp"
#include "stuq/evaluate.hpp"
#include "stuq/losses.hpp"
#include "stuq/model.hpp"
#include "stuq/optim.hpp"
#include "stuq/pipeline.hpp"
#include "stuq/tensor.hpp"
#include "stuq/train.hpp"

#endif  // STUQ_STUQ_HPP
