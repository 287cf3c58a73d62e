// SPDX-License-Identifier: Apache-2.0
#include "evacap/data.hpp"

#include <cstdio>
#include <fstream>

#include "evacap/errors.hpp"
#include "evacap/model.hpp"
#include "evacap/rng.hpp"

namespace evacap::data {

using nlohmann::json;

namespace {

constexpr std::size_t kVerbs = 3;
constexpr std::size_t kObjects = 3;
constexpr std::size_t kBackgrounds = 4;

Tensor gaussian_row(std::size_t n, Rng& rng) {
  Tensor t({1, n});
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

}  // namespace

int Vocabulary::class_token(std::size_t c) const { return model::kEos + 1 + static_cast<int>(c); }
int Vocabulary::verb_token(std::size_t c) const {
  return model::kEos + 1 + static_cast<int>(n_classes + c % kVerbs);
}
int Vocabulary::attribute_token(std::size_t a) const {
  return model::kEos + 1 + static_cast<int>(n_classes + kVerbs + a);
}
int Vocabulary::object_token(std::size_t a) const {
  return model::kEos + 1 + static_cast<int>(n_classes + kVerbs + n_attributes + a % kObjects);
}
std::size_t Vocabulary::size() const { return 3 + n_classes + kVerbs + n_attributes + kObjects; }

void SyntheticTaskSpec::validate() const {
  if (n_classes == 0 || n_attributes == 0) throw InvalidInput("task spec: class and attribute counts must be >= 1");
  if (!(visual_informative >= 0.0 && visual_informative <= 1.0)) {
    throw InvalidInput("task spec: visual_informative must lie in [0, 1]");
  }
  if (visual_informative > 0.0 && n_attributes < 2) {
    throw InvalidInput("task spec: visually informative clips need at least 2 attributes");
  }
  if (!(noise_level >= 0.0)) throw InvalidInput("task spec: noise_level must be >= 0");
  if (n_train == 0 || n_val == 0 || n_test == 0) throw InvalidInput("task spec: split counts must be >= 1");
  if (T_a == 0 || T_v == 0 || d_audio == 0 || d_visual == 0) throw InvalidInput("task spec: dims must be >= 1");
}

std::size_t SyntheticTaskSpec::vocab_needed() const { return Vocabulary{n_classes, n_attributes}.size(); }

json to_json(const SyntheticTaskSpec& s) {
  return json{{"n_classes", s.n_classes}, {"n_attributes", s.n_attributes},
              {"visual_informative", s.visual_informative}, {"noise_level", s.noise_level},
              {"n_train", s.n_train}, {"n_val", s.n_val}, {"n_test", s.n_test}, {"seed", s.seed},
              {"T_a", s.T_a}, {"T_v", s.T_v}, {"d_audio", s.d_audio}, {"d_visual", s.d_visual}};
}

SyntheticTaskSpec task_from_json(const json& j) {
  if (!j.is_object()) throw InvalidInput("task spec must be an object");
  SyntheticTaskSpec s;
  const json defaults = to_json(s);
  for (const auto& [key, _] : j.items()) {
    if (!defaults.contains(key)) throw InvalidInput("task spec: unknown key '" + key + "'");
  }
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("n_classes", s.n_classes);
    get("n_attributes", s.n_attributes);
    get("visual_informative", s.visual_informative);
    get("noise_level", s.noise_level);
    get("n_train", s.n_train);
    get("n_val", s.n_val);
    get("n_test", s.n_test);
    get("seed", s.seed);
    get("T_a", s.T_a);
    get("T_v", s.T_v);
    get("d_audio", s.d_audio);
    get("d_visual", s.d_visual);
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("task spec: ") + e.what());
  }
  s.validate();
  return s;
}

Dataset generate_synthetic(const SyntheticTaskSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const Vocabulary vocab{spec.n_classes, spec.n_attributes};

  std::vector<Tensor> audio_proto, class_sig, attr_sig, background;
  for (std::size_t c = 0; c < spec.n_classes; ++c) audio_proto.push_back(gaussian_row(spec.d_audio, rng));
  for (std::size_t c = 0; c < spec.n_classes; ++c) class_sig.push_back(gaussian_row(spec.d_visual, rng));
  for (std::size_t a = 0; a < spec.n_attributes; ++a) attr_sig.push_back(gaussian_row(spec.d_visual, rng));
  for (std::size_t b = 0; b < kBackgrounds; ++b) background.push_back(gaussian_row(spec.d_visual, rng));

  auto make = [&](const std::string& split, std::size_t index) {
    Sample s;
    char id[64];
    std::snprintf(id, sizeof(id), "%s-%06zu", split.c_str(), index);
    s.id = id;
    const std::size_t c = rng.uniform_int(spec.n_classes);
    std::size_t a = c % spec.n_attributes;
    if (rng.bernoulli(spec.visual_informative)) {
      // Any attribute except the class default, uniformly.
      std::size_t other = rng.uniform_int(spec.n_attributes - 1);
      a = other >= a ? other + 1 : other;
    }
    s.audio = Tensor({spec.T_a, spec.d_audio});
    for (std::size_t t = 0; t < spec.T_a; ++t)
      for (std::size_t j = 0; j < spec.d_audio; ++j)
        s.audio(t, j) = audio_proto[c][j] + spec.noise_level * rng.normal();

    s.visual = Tensor({spec.T_v, spec.d_visual});
    const std::size_t salient = rng.uniform_int(spec.T_v);
    for (std::size_t f = 0; f < spec.T_v; ++f) {
      const std::size_t bg = rng.uniform_int(kBackgrounds);
      for (std::size_t j = 0; j < spec.d_visual; ++j) {
        const double base = f == salient ? class_sig[c][j] + attr_sig[a][j] : background[bg][j];
        s.visual(f, j) = base + spec.noise_level * rng.normal();
      }
    }
    s.caption = {vocab.class_token(c), vocab.verb_token(c), vocab.attribute_token(a), vocab.object_token(a)};
    return s;
  };

  Dataset ds;
  for (std::size_t i = 0; i < spec.n_train; ++i) ds.train.push_back(make("train", i));
  for (std::size_t i = 0; i < spec.n_val; ++i) ds.val.push_back(make("val", i));
  for (std::size_t i = 0; i < spec.n_test; ++i) ds.test.push_back(make("test", i));
  return ds;
}

augment::Batch to_batch(const std::vector<Sample>& samples) {
  augment::Batch b;
  for (const auto& s : samples) {
    b.audio.push_back(s.audio);
    b.visual.push_back(s.visual);
    b.captions.push_back(s.caption);
    b.mismatch_flags.push_back(false);
  }
  return b;
}

namespace {

json matrix_to_json(const Tensor& t) {
  json rows = json::array();
  for (std::size_t i = 0; i < t.rows(); ++i) rows.push_back(std::vector<double>(t.row(i).begin(), t.row(i).end()));
  return rows;
}

Tensor matrix_from_json(const json& j, const char* field) {
  if (!j.is_array() || j.empty()) throw InvalidInput(std::string("dataset record: '") + field + "' must be a nonempty 2-D array");
  return Tensor::from_rows(j.get<std::vector<std::vector<double>>>());
}

}  // namespace

json sample_to_json(const Sample& s) {
  return json{{"id", s.id}, {"audio", matrix_to_json(s.audio)}, {"visual", matrix_to_json(s.visual)},
              {"caption", s.caption}};
}

Sample sample_from_json(const json& j) {
  try {
    Sample s;
    s.id = j.at("id").get<std::string>();
    s.audio = matrix_from_json(j.at("audio"), "audio");
    s.visual = matrix_from_json(j.at("visual"), "visual");
    s.caption = j.at("caption").get<std::vector<int>>();
    return s;
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("dataset record: ") + e.what());
  }
}

void write_jsonl(const std::string& path, const std::vector<Sample>& samples) {
  std::ofstream os(path);
  if (!os) throw InvalidInput("cannot write " + path);
  for (const auto& s : samples) os << sample_to_json(s).dump() << '\n';
  if (!os) throw InvalidInput("failed writing " + path);
}

std::vector<Sample> read_jsonl(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InvalidInput("cannot read " + path);
  std::vector<Sample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(sample_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw InvalidInput(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const InvalidInput& e) {
      throw InvalidInput(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

double dataset_checksum(const std::vector<Sample>& samples) {
  double s = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double w = static_cast<double>(1 + i % 11);
    s += w * (checksum(samples[i].audio) + 0.5 * checksum(samples[i].visual));
    for (std::size_t k = 0; k < samples[i].caption.size(); ++k)
      s += w * static_cast<double>(samples[i].caption[k]) * static_cast<double>(k + 1);
  }
  return s;
}

}  // namespace evacap::data
