// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "clorae/achievement.hpp"
#include "clorae/checkpoint.hpp"
#include "clorae/clorae_linear.hpp"
#include "clorae/errors.hpp"
#include "clorae/gradcheck.hpp"
#include "clorae/lora.hpp"
#include "clorae/mim.hpp"
#include "clorae/model.hpp"
#include "clorae/ops.hpp"
#include "clorae/optim.hpp"
#include "clorae/random.hpp"
#include "clorae/taskgen.hpp"
#include "clorae/tensor.hpp"
#include "clorae/trainer.hpp"
