/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The sonosynth Authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef SONOSYNTH_SONOSYNTH_HPP
#define SONOSYNTH_SONOSYNTH_HPP

#include "sonosynth/deform.hpp"
#include "sonosynth/io.hpp"
#include "sonosynth/metrics.hpp"
#include "sonosynth/parallel.hpp"
#include "sonosynth/phantom.hpp"
#include "sonosynth/pipeline.hpp"
#include "sonosynth/render.hpp"
#include "sonosynth/reslice.hpp"
#include "sonosynth/rng.hpp"
#include "sonosynth/vec3.hpp"
#include "sonosynth/volume.hpp"

#endif  // SONOSYNTH_SONOSYNTH_HPP
