// Copyright 2026 The evstr Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "evstr/autograd.hpp"
#include "evstr/checkpoint.hpp"
#include "evstr/common.hpp"
#include "evstr/config.hpp"
#include "evstr/event_io.hpp"
#include "evstr/grad_check.hpp"
#include "evstr/layers.hpp"
#include "evstr/mnel.hpp"
#include "evstr/model.hpp"
#include "evstr/optim.hpp"
#include "evstr/pipeline.hpp"
#include "evstr/set_batch.hpp"
#include "evstr/tensor.hpp"
#include "evstr/voxelizer.hpp"
#include "evstr/vsal.hpp"
