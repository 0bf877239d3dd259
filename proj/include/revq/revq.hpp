#pragma once

#include "checkpoint.hpp"
#include "common.hpp"
#include "corpus.hpp"
#include "encoder.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "service.hpp"
#include "synthetic.hpp"
#include "textprep.hpp"
#include "trainer.hpp"
