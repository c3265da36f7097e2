#pragma once

#include "urwkv/adamw.hpp"
#include "urwkv/blocks.hpp"
#include "urwkv/checkpoint.hpp"
#include "urwkv/config.hpp"
#include "urwkv/data.hpp"
#include "urwkv/error.hpp"
#include "urwkv/gradcheck.hpp"
#include "urwkv/grid.hpp"
#include "urwkv/image_io.hpp"
#include "urwkv/loss.hpp"
#include "urwkv/metrics.hpp"
#include "urwkv/model.hpp"
#include "urwkv/mscf.hpp"
#include "urwkv/ops.hpp"
#include "urwkv/parallel.hpp"
#include "urwkv/params.hpp"
#include "urwkv/tape.hpp"
#include "urwkv/tensor.hpp"
#include "urwkv/train.hpp"
#include "urwkv/wavelet.hpp"
#include "urwkv/wkv.hpp"
