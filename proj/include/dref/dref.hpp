// Copyright 2026 The D-Ref Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "dref/common.hpp"
#include "dref/corpus.hpp"
#include "dref/autodiff.hpp"
#include "dref/model.hpp"
#include "dref/attribution.hpp"
#include "dref/extraction.hpp"
#include "dref/metrics.hpp"
#include "dref/refine.hpp"
#include "dref/eval.hpp"
