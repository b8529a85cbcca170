#pragma once

// Umbrella header.

#include "headtrack/error.hpp"
#include "headtrack/geometry.hpp"
#include "headtrack/landmarks.hpp"
#include "headtrack/kdtree.hpp"
#include "headtrack/sparse_pose.hpp"
#include "headtrack/dense_registration.hpp"
#include "headtrack/morphable_model.hpp"
#include "headtrack/recording.hpp"
#include "headtrack/tracking.hpp"
#include "headtrack/pipeline.hpp"
#include "headtrack/evaluation.hpp"
#include "headtrack/synth_oracle.hpp"
#include "headtrack/io.hpp"
