#pragma once

// Everything, plus the shipped default phantom and vocabulary.

#include <memory>
#include <string>
#include <vector>

#include "carmtwin/controller.hpp"
#include "carmtwin/error.hpp"
#include "carmtwin/eval.hpp"
#include "carmtwin/external.hpp"
#include "carmtwin/geometry.hpp"
#include "carmtwin/grid.hpp"
#include "carmtwin/image_io.hpp"
#include "carmtwin/interpreter.hpp"
#include "carmtwin/numfmt.hpp"
#include "carmtwin/phantom.hpp"
#include "carmtwin/protocol.hpp"
#include "carmtwin/rng.hpp"
#include "carmtwin/segmentation.hpp"
#include "carmtwin/service.hpp"
#include "carmtwin/twin.hpp"
#include "carmtwin/vocabulary.hpp"
#include "carmtwin/xray.hpp"

#include "carmtwin/assets.hpp"

namespace carmtwin {

/// The shipped torso phantom with its vocabulary. Built once per process.
inline const PhantomEntry& default_phantom()
{
    static const PhantomEntry entry = [] {
        auto volume = std::make_shared<const LabeledVolume>(build_synthetic_phantom(parse_phantom_spec(std::string(assets::torso_phantom))));
        auto vocabulary = std::make_shared<const PromptVocabulary>(parse_vocabulary(std::string(assets::vocabulary), *volume));
        return PhantomEntry{volume, vocabulary};
    }();
    return entry;
}

} // namespace carmtwin
