#pragma once

#include "uasparse/errors.hpp"
#include "uasparse/random.hpp"
#include "uasparse/binary_io.hpp"
#include "uasparse/preprocess.hpp"
#include "uasparse/embeddings.hpp"
#include "uasparse/numerics.hpp"
#include "uasparse/model.hpp"
#include "uasparse/pipeline.hpp"
#include "uasparse/synthetic.hpp"
#include "uasparse/vulnscore.hpp"
#include "uasparse/nvd_client.hpp"
