#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vsm/streams.hpp"
#include "vsm/vision.hpp"

namespace vsm {

// One dataset line: the sample plus how its image is stored (a ppm path
// relative to the dataset file, or an inline token grid).
struct DatasetEntry {
    TrainingSample sample;
    std::string image_ppm;  // empty when the image is absent or inline
    nlohmann::json meta;
};

namespace detail {

inline nlohmann::json image_json(const DatasetEntry& e) {
    if (!e.image_ppm.empty()) return nlohmann::json{{"ppm_path", e.image_ppm}};
    const ImageRef& img = e.sample.image();
    if (!img) return nullptr;
    nlohmann::json tokens = nlohmann::json::array();
    for (size_t i = 0; i < img->tokens.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (size_t j = 0; j < img->tokens.cols(); ++j) row.push_back(img->tokens.at(i, j));
        tokens.push_back(std::move(row));
    }
    return nlohmann::json{{"tokens", std::move(tokens)}};
}

inline std::vector<uint8_t> mask_from_json(const nlohmann::json& j) {
    std::vector<uint8_t> out;
    for (const auto& v : j) out.push_back(v.get<bool>() ? 1 : 0);
    return out;
}

inline nlohmann::json mask_to_json(const std::vector<uint8_t>& m) {
    nlohmann::json out = nlohmann::json::array();
    for (uint8_t b : m) out.push_back(b != 0);
    return out;
}

}  // namespace detail

inline nlohmann::json dataset_line(const DatasetEntry& e) {
    nlohmann::json j;
    j["image"] = detail::image_json(e);
    j["meta"] = e.meta.is_null() ? nlohmann::json::object() : e.meta;
    if (e.sample.is_speech()) {
        const SpeechSample& s = e.sample.speech();
        j["kind"] = "speech";
        j["text_stream"] = s.text;
        j["assistant_audio"] = s.assistant_audio;
        j["user_audio"] = s.user_audio;
        j["text_loss_mask"] = detail::mask_to_json(s.text_loss_mask);
        j["audio_loss_mask"] = detail::mask_to_json(s.audio_loss_mask);
    } else {
        const SpeechlessSample& s = e.sample.speechless();
        j["kind"] = "speechless";
        j["tokens"] = s.tokens;
        j["loss_mask"] = detail::mask_to_json(s.loss_mask);
    }
    return j;
}

inline void write_dataset_jsonl(const std::string& path, const std::vector<DatasetEntry>& entries) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("write_dataset: cannot open " + path);
    for (const auto& e : entries) out << dataset_line(e).dump() << "\n";
    if (!out) throw IoError("write_dataset: write failed for " + path);
}

// Loads a dataset file; ppm references are resolved relative to the file and
// encoded with the given encoder. Entries with inline token grids do not need
// an encoder.
inline std::vector<DatasetEntry> load_dataset_jsonl(const std::string& path,
                                                    const PatchEncoder* encoder = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_dataset: cannot open " + path);
    const auto dir = std::filesystem::path(path).parent_path();
    std::vector<DatasetEntry> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw IoError("load_dataset: " + path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        DatasetEntry entry;
        entry.meta = j.value("meta", nlohmann::json::object());
        ImageRef image;
        const auto& ij = j.at("image");
        if (!ij.is_null()) {
            if (ij.contains("ppm_path")) {
                if (!encoder)
                    throw ConfigError("load_dataset: " + path + " references ppm images, encoder required");
                entry.image_ppm = ij.at("ppm_path").get<std::string>();
                auto img = RasterImage::load_ppm((dir / entry.image_ppm).string());
                image = std::make_shared<ImageTokenGrid>(encoder->encode(img));
            } else {
                auto grid = std::make_shared<ImageTokenGrid>();
                const auto& rows = ij.at("tokens");
                const size_t n = rows.size(), d = rows.empty() ? 0 : rows[0].size();
                grid->tokens = TensorF({n, d});
                for (size_t i = 0; i < n; ++i)
                    for (size_t jj = 0; jj < d; ++jj) grid->tokens.at(i, jj) = rows[i][jj].get<float>();
                grid->source_id = hex64(fnv1a(grid->tokens.data(), n * d * sizeof(float)));
                image = grid;
            }
        }
        const std::string kind = j.at("kind");
        if (kind == "speech") {
            SpeechSample s;
            s.text = j.at("text_stream").get<std::vector<int>>();
            s.assistant_audio = j.at("assistant_audio").get<std::vector<std::vector<int>>>();
            s.user_audio = j.at("user_audio").get<std::vector<std::vector<int>>>();
            s.text_loss_mask = detail::mask_from_json(j.at("text_loss_mask"));
            s.audio_loss_mask = detail::mask_from_json(j.at("audio_loss_mask"));
            s.image = image;
            entry.sample.value = std::move(s);
        } else if (kind == "speechless") {
            SpeechlessSample s;
            s.tokens = j.at("tokens").get<std::vector<int>>();
            s.loss_mask = detail::mask_from_json(j.at("loss_mask"));
            s.image = image;
            entry.sample.value = std::move(s);
        } else {
            throw IoError("load_dataset: unknown kind '" + kind + "' at " + path + ":" +
                          std::to_string(lineno));
        }
        out.push_back(std::move(entry));
    }
    return out;
}

}  // namespace vsm
