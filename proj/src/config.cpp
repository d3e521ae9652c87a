#include "avatarkit/config.hpp"

#include <fstream>

#include "avatarkit/trainer.hpp"

namespace avk {

using nlohmann::json;

json default_config() {
    json cfg;
    cfg["synth"] = {{"seed", 1},
                    {"resolution", 64},
                    {"frame_count", 200},
                    {"motion_amplitude", 0.5},
                    {"texture_frequency", 6.0},
                    {"fps", 25.0},
                    {"identity_tag", "synthetic"}};
    TrainConfig tc;
    json trainer = tc.to_json();
    trainer["dataset"] = "";
    cfg["trainer"] = trainer;
    cfg["reenact"] = {{"checkpoint", ""}, {"driving", ""}, {"mode", "self"}, {"background", ""}};
    cfg["eval"] = {{"pred", ""}, {"ref", ""}, {"backbone", BackboneSpec().to_json()}};
    return cfg;
}

namespace {

void merge_into(json& base, const json& user, const std::string& path) {
    for (auto it = user.begin(); it != user.end(); ++it) {
        std::string here = path.empty() ? it.key() : path + "." + it.key();
        if (!base.contains(it.key())) throw UsageError("unknown config key: " + here);
        if (base[it.key()].is_object() && it.value().is_object())
            merge_into(base[it.key()], it.value(), here);
        else
            base[it.key()] = it.value();
    }
}

}  // namespace

json load_config(const std::filesystem::path& file) {
    json cfg = default_config();
    std::ifstream f(file);
    if (!f) throw UsageError("cannot open config file " + file.string());
    json user;
    try {
        f >> user;
    } catch (const json::exception& e) {
        throw FormatError("config file does not parse: " + std::string(e.what()));
    }
    if (!user.is_object()) throw FormatError("config file must hold a JSON object");
    merge_into(cfg, user, "");
    return cfg;
}

void apply_override(json& config, const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw UsageError("override must look like key.path=value, got '" + assignment + "'");
    std::string path = assignment.substr(0, eq);
    std::string value = assignment.substr(eq + 1);

    json* node = &config;
    size_t pos = 0;
    while (true) {
        size_t dot = path.find('.', pos);
        std::string key = path.substr(pos, dot == std::string::npos ? dot : dot - pos);
        if (!node->is_object() || !node->contains(key))
            throw UsageError("unknown config key: " + path);
        node = &(*node)[key];
        if (dot == std::string::npos) break;
        pos = dot + 1;
    }

    try {
        if (node->is_boolean()) {
            if (value == "true" || value == "1")
                *node = true;
            else if (value == "false" || value == "0")
                *node = false;
            else
                throw UsageError("expected a boolean for " + path + ", got '" + value + "'");
        } else if (node->is_number_integer() || node->is_number_unsigned()) {
            *node = std::stoll(value);
        } else if (node->is_number_float()) {
            *node = std::stod(value);
        } else if (node->is_string()) {
            *node = value;
        } else {
            *node = json::parse(value);
        }
    } catch (const UsageError&) {
        throw;
    } catch (const std::exception&) {
        throw UsageError("cannot parse value for " + path + ": '" + value + "'");
    }
}

void write_effective_config(const json& config, const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    std::ofstream f(out_dir / "effective-config.json");
    if (!f) throw IoError("cannot write effective-config.json in " + out_dir.string());
    f << config.dump(2) << "\n";
}

}  // namespace avk
