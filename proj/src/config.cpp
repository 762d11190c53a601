// SPDX-License-Identifier: Apache-2.0
#include "mhaseg/config.hpp"

#include <charconv>
#include <sstream>

#include "mhaseg/error.hpp"
#include "mhaseg/io_util.hpp"

namespace mhaseg::config {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    const auto next = s.find(sep, pos);
    out.push_back(trim(s.substr(pos, next == std::string_view::npos ? std::string_view::npos : next - pos)));
    if (next == std::string_view::npos) return out;
    pos = next + 1;
  }
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value) {
  fail(ErrorCode::BadConfig, "bad value '" + std::string(value) + "' for " + std::string(key));
}

template <typename T>
T number(std::string_view key, std::string_view value) {
  T v{};
  const auto r = std::from_chars(value.data(), value.data() + value.size(), v);
  if (r.ec != std::errc{} || r.ptr != value.data() + value.size() || value.empty()) bad_value(key, value);
  return v;
}

bool boolean(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  bad_value(key, value);
}

std::string num(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    if constexpr (std::is_floating_point_v<T>) {
      out += num(v[i]);
    } else {
      out += std::to_string(v[i]);
    }
  }
  return out;
}

preprocess::Modality modality(std::string_view key, std::string_view s) {
  using preprocess::Modality;
  for (auto m : {Modality::T2, Modality::T1CE, Modality::FLAIR}) {
    if (preprocess::suffix(m) == s) return m;
  }
  bad_value(key, s);
}

}  // namespace

Extent3 parse_extent(std::string_view text) {
  const auto parts = split(text, ',');
  auto dim = [&](std::string_view p) {
    const auto v = number<std::size_t>("extent", p);
    if (v == 0) bad_value("extent", text);
    return v;
  };
  if (parts.size() == 1) {
    const auto e = dim(parts[0]);
    return {e, e, e};
  }
  if (parts.size() != 3) bad_value("extent", text);
  return {dim(parts[0]), dim(parts[1]), dim(parts[2])};
}

std::string format_extent(Extent3 e) {
  return std::to_string(e.depth) + "," + std::to_string(e.height) + "," + std::to_string(e.width);
}

void apply(RunConfig& c, std::string_view key, std::string_view value) {
  key = trim(key);
  value = trim(value);
  auto& m = c.model;
  auto& t = c.train;
  auto& p = c.preprocess;
  auto size = [&] { return number<std::size_t>(key, value); };
  auto real = [&] { return number<double>(key, value); };

  if (key == "model.in_channels") m.in_channels = size();
  else if (key == "model.num_classes") m.num_classes = size();
  else if (key == "model.base_filters") m.base_filters = size();
  else if (key == "model.levels") m.levels = size();
  else if (key == "model.kernel") m.kernel = size();
  else if (key == "model.heads") m.heads = size();
  else if (key == "model.attention_token_limit") m.attention_token_limit = size();
  else if (key == "model.attention_reduction") m.attention_reduction = size();
  else if (key == "model.channel_affine") m.channel_affine = boolean(key, value);
  else if (key == "model.input_extent") {
    c.input_extent = parse_extent(value);
    m.input_extent = *c.input_extent;
  } else if (key == "train.learning_rate") {
    c.learning_rates.clear();
    for (auto part : split(value, ',')) c.learning_rates.push_back(number<double>(key, part));
    t.learning_rate = c.learning_rates.front();
  } else if (key == "train.batch_size") {
    c.batch_sizes.clear();
    for (auto part : split(value, ',')) c.batch_sizes.push_back(number<std::size_t>(key, part));
    t.batch_size = c.batch_sizes.front();
  } else if (key == "train.epochs") t.epochs = size();
  else if (key == "train.patience") t.patience = size();
  else if (key == "train.val_fraction") t.val_fraction = real();
  else if (key == "train.seed") t.seed = number<std::uint64_t>(key, value);
  else if (key == "train.loss_mix") t.loss_mix = real();
  else if (key == "train.max_steps") t.max_steps = size();
  else if (key == "train.record_wall_time") t.record_wall_time = boolean(key, value);
  else if (key == "preprocess.crop_target") p.crop_target = parse_extent(value);
  else if (key == "preprocess.label_ratio_threshold") p.label_ratio_threshold = real();
  else if (key == "preprocess.crop_multiple") p.crop_multiple = size();
  else if (key == "preprocess.modalities") {
    p.modalities.clear();
    for (auto part : split(value, ',')) p.modalities.push_back(modality(key, part));
  } else {
    fail(ErrorCode::BadConfig, "unknown configuration key '" + std::string(key) + "'");
  }
}

void apply_assignment(RunConfig& config, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    fail(ErrorCode::BadConfig, "expected key=value, got '" + std::string(assignment) + "'");
  }
  apply(config, assignment.substr(0, eq), assignment.substr(eq + 1));
}

RunConfig parse(std::string_view text) {
  RunConfig c;
  std::size_t line_no = 0;
  for (auto line : split(text, '\n')) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = trim(line.substr(0, hash));
    if (line.empty()) continue;
    try {
      apply_assignment(c, line);
    } catch (const Error& e) {
      fail(ErrorCode::BadConfig, "line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return c;
}

RunConfig load(const std::filesystem::path& path) { return parse(io::read_text(path)); }

std::string format(const RunConfig& c) {
  const auto& m = c.model;
  const auto& t = c.train;
  const auto& p = c.preprocess;
  std::ostringstream os;
  os << "model.in_channels = " << m.in_channels << "\n"
     << "model.num_classes = " << m.num_classes << "\n"
     << "model.base_filters = " << m.base_filters << "\n"
     << "model.levels = " << m.levels << "\n"
     << "model.kernel = " << m.kernel << "\n"
     << "model.heads = " << m.heads << "\n"
     << "model.attention_token_limit = " << m.attention_token_limit << "\n"
     << "model.attention_reduction = " << m.attention_reduction << "\n"
     << "model.channel_affine = " << (m.channel_affine ? "true" : "false") << "\n";
  if (c.input_extent) os << "model.input_extent = " << format_extent(*c.input_extent) << "\n";
  os << "train.learning_rate = " << join(c.learning_rates) << "\n"
     << "train.batch_size = " << join(c.batch_sizes) << "\n"
     << "train.epochs = " << t.epochs << "\n"
     << "train.patience = " << t.patience << "\n"
     << "train.val_fraction = " << num(t.val_fraction) << "\n"
     << "train.seed = " << t.seed << "\n"
     << "train.loss_mix = " << num(t.loss_mix) << "\n"
     << "train.max_steps = " << t.max_steps << "\n"
     << "train.record_wall_time = " << (t.record_wall_time ? "true" : "false") << "\n"
     << "preprocess.crop_target = " << format_extent(p.crop_target) << "\n"
     << "preprocess.label_ratio_threshold = " << num(p.label_ratio_threshold) << "\n"
     << "preprocess.crop_multiple = " << p.crop_multiple << "\n"
     << "preprocess.modalities = ";
  for (std::size_t i = 0; i < p.modalities.size(); ++i) os << (i ? "," : "") << preprocess::suffix(p.modalities[i]);
  os << "\n";
  return os.str();
}

}  // namespace mhaseg::config
