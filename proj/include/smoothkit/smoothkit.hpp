#ifndef SMOOTHKIT_SMOOTHKIT_HPP
#define SMOOTHKIT_SMOOTHKIT_HPP

#include "smoothkit/tensor.hpp"
#include "smoothkit/ops.hpp"
#include "smoothkit/graph.hpp"
#include "smoothkit/io.hpp"
#include "smoothkit/layers.hpp"
#include "smoothkit/distill.hpp"
#include "smoothkit/optim.hpp"
#include "smoothkit/train.hpp"
#include "smoothkit/oracle.hpp"

#endif  // SMOOTHKIT_SMOOTHKIT_HPP
