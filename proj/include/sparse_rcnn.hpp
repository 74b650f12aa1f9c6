#pragma once

#include <sparse_rcnn/checkpoint.hpp>
#include <sparse_rcnn/config.hpp>
#include <sparse_rcnn/data.hpp>
#include <sparse_rcnn/errors.hpp>
#include <sparse_rcnn/eval.hpp>
#include <sparse_rcnn/geometry.hpp>
#include <sparse_rcnn/grad_check.hpp>
#include <sparse_rcnn/grad_suite.hpp>
#include <sparse_rcnn/losses.hpp>
#include <sparse_rcnn/matching.hpp>
#include <sparse_rcnn/model.hpp>
#include <sparse_rcnn/ops.hpp>
#include <sparse_rcnn/optim.hpp>
#include <sparse_rcnn/tensor.hpp>
#include <sparse_rcnn/train.hpp>
#include <sparse_rcnn/visualize.hpp>
