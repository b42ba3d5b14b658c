#include "pfl/sim/config_io.hpp"

namespace pfl::sim {

Json to_json(const SimConfig& cfg) {
    Json regime = {{"kind", cfg.regime == Regime::Memoryless ? "memoryless" : "persistent"}};
    if (cfg.regime == Regime::Persistent) {
        regime["flip_rate"] = cfg.flip_rate;
        regime["bias"] = cfg.bias;
    }
    return Json{{"stock_id", cfg.stock_id},
                {"limit_rate", cfg.limit_rate},
                {"market_rate", cfg.market_rate},
                {"cancel_rate", cfg.cancel_rate},
                {"levels", cfg.levels},
                {"tick_size", cfg.tick_size},
                {"initial_depth", cfg.initial_depth},
                {"mean_event_gap", cfg.mean_event_gap},
                {"regime", regime},
                {"sweep_rate", cfg.sweep_rate},
                {"sweep_threshold", cfg.sweep_threshold},
                {"seed", cfg.seed},
                {"start_price_ticks", cfg.start_price_ticks}};
}

SimConfig sim_config_from_json(const Json& doc, const std::string& where) {
    reject_unknown_keys(doc,
                        {"stock_id", "limit_rate", "market_rate", "cancel_rate", "levels",
                         "tick_size", "initial_depth", "mean_event_gap", "regime", "sweep_rate",
                         "sweep_threshold", "seed", "start_price_ticks"},
                        where);
    SimConfig cfg;
    read_optional(doc, "stock_id", cfg.stock_id, where);
    read_optional(doc, "limit_rate", cfg.limit_rate, where);
    read_optional(doc, "market_rate", cfg.market_rate, where);
    read_optional(doc, "cancel_rate", cfg.cancel_rate, where);
    read_optional(doc, "levels", cfg.levels, where);
    read_optional(doc, "tick_size", cfg.tick_size, where);
    read_optional(doc, "initial_depth", cfg.initial_depth, where);
    read_optional(doc, "mean_event_gap", cfg.mean_event_gap, where);
    read_optional(doc, "sweep_rate", cfg.sweep_rate, where);
    read_optional(doc, "sweep_threshold", cfg.sweep_threshold, where);
    read_optional(doc, "seed", cfg.seed, where);
    read_optional(doc, "start_price_ticks", cfg.start_price_ticks, where);
    if (auto it = doc.find("regime"); it != doc.end()) {
        const std::string here = where + ".regime";
        reject_unknown_keys(*it, {"kind", "flip_rate", "bias"}, here);
        std::string kind;
        read_required(*it, "kind", kind, here);
        if (kind == "memoryless") {
            cfg.regime = Regime::Memoryless;
            if (it->contains("flip_rate") || it->contains("bias")) {
                throw Error(ErrorCode::InvalidConfig, here + ": memoryless takes no parameters");
            }
        } else if (kind == "persistent") {
            cfg.regime = Regime::Persistent;
            read_required(*it, "flip_rate", cfg.flip_rate, here);
            read_required(*it, "bias", cfg.bias, here);
        } else {
            throw Error(ErrorCode::InvalidConfig, here + ".kind: '" + kind + "'");
        }
    }
    validate(cfg);
    return cfg;
}

namespace {

const char* const kRangeKeys[] = {"limit_rate",  "market_rate",     "cancel_rate",
                                  "initial_depth", "mean_event_gap", "sweep_rate",
                                  "sweep_threshold", "flip_rate",    "bias"};

std::optional<Range>* slot(UniverseRanges& r, std::string_view key) {
    if (key == "limit_rate") return &r.limit_rate;
    if (key == "market_rate") return &r.market_rate;
    if (key == "cancel_rate") return &r.cancel_rate;
    if (key == "initial_depth") return &r.initial_depth;
    if (key == "mean_event_gap") return &r.mean_event_gap;
    if (key == "sweep_rate") return &r.sweep_rate;
    if (key == "sweep_threshold") return &r.sweep_threshold;
    if (key == "flip_rate") return &r.flip_rate;
    if (key == "bias") return &r.bias;
    return nullptr;
}

}  // namespace

Json to_json(const UniverseRanges& ranges) {
    Json doc = {{"base", to_json(ranges.base)}, {"ranges", Json::object()}};
    auto copy = ranges;
    for (const char* key : kRangeKeys) {
        if (const auto& r = *slot(copy, key)) doc["ranges"][key] = Json::array({r->lo, r->hi});
    }
    return doc;
}

UniverseRanges universe_ranges_from_json(const Json& doc, const std::string& where) {
    reject_unknown_keys(doc, {"base", "ranges"}, where);
    UniverseRanges out;
    if (auto it = doc.find("base"); it != doc.end()) out.base = sim_config_from_json(*it, where + ".base");
    if (auto it = doc.find("ranges"); it != doc.end()) {
        if (!it->is_object()) throw Error(ErrorCode::InvalidConfig, where + ".ranges: expected an object");
        for (const auto& [key, value] : it->items()) {
            auto* target = slot(out, key);
            if (target == nullptr) {
                throw Error(ErrorCode::InvalidConfig, where + ".ranges: unknown key '" + key + "'");
            }
            if (!value.is_array() || value.size() != 2 || !value[0].is_number() ||
                !value[1].is_number()) {
                throw Error(ErrorCode::InvalidConfig, where + ".ranges." + key + ": expected [lo, hi]");
            }
            *target = Range{value[0].get<double>(), value[1].get<double>()};
        }
    }
    return out;
}

}  // namespace pfl::sim
