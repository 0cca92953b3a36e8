#pragma once

#include "cas/error.hpp"
#include "cas/tensor.hpp"
#include "cas/tape.hpp"
#include "cas/ops.hpp"
#include "cas/model.hpp"
#include "cas/objectives.hpp"
#include "cas/attacks.hpp"
#include "cas/analysis.hpp"
#include "cas/datasets.hpp"
#include "cas/config.hpp"
#include "cas/checkpoint.hpp"
#include "cas/evaluation.hpp"
#include "cas/training.hpp"
#include "cas/grad_check.hpp"
