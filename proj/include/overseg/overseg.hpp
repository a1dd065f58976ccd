#pragma once

#include "overseg/autograd.hpp"
#include "overseg/data.hpp"
#include "overseg/error.hpp"
#include "overseg/gradcheck.hpp"
#include "overseg/io.hpp"
#include "overseg/metrics.hpp"
#include "overseg/nn.hpp"
#include "overseg/rf.hpp"
#include "overseg/tensor.hpp"
#include "overseg/train.hpp"
