// SPDX-License-Identifier: Apache-2.0
//
// libtorch defines a glog-style CHECK macro; doctest's must win in tests.

#pragma once

#include <torch/torch.h>

#undef CHECK
#include "doctest.h"
