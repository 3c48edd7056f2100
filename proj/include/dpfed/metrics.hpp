// Copyright 2026 The dpfed Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "dpfed/errors.hpp"

namespace dpfed {

// One labeled entity occurrence: [start, end] token indices, inclusive.
struct Span {
  std::string type;
  std::size_t start = 0;
  std::size_t end = 0;

  friend bool operator<(const Span& a, const Span& b) {
    return std::tie(a.start, a.end, a.type) < std::tie(b.start, b.end, b.type);
  }
  friend bool operator==(const Span& a, const Span& b) {
    return a.start == b.start && a.end == b.end && a.type == b.type;
  }
};

using SpanSet = std::set<Span>;

namespace detail {

struct TagInfo {
  bool is_o = true;
  bool is_b = false;
  std::string type;
};

// Tags follow the usual convention: "O", "B-<type>", "I-<type>". Anything
// else is treated as O so decoding stays total.
inline TagInfo parse_tag(const std::string& name) {
  TagInfo info;
  if (name.size() >= 2 && (name[0] == 'B' || name[0] == 'I') && name[1] == '-') {
    info.is_o = false;
    info.is_b = name[0] == 'B';
    info.type = name.substr(2);
  }
  return info;
}

}  // namespace detail

// Decodes BIO labels into spans. A span opens at each B tag and extends
// through consecutive same-type I tags; it closes at O, at any B, at an I of
// a different type, or at the end. Lenient rule: an I with no open same-type
// span opens a new span itself.
inline SpanSet extract_spans(const std::vector<int>& labels,
                             const std::vector<std::string>& tag_names) {
  std::vector<detail::TagInfo> tags(tag_names.size());
  for (std::size_t i = 0; i < tag_names.size(); ++i)
    tags[i] = detail::parse_tag(tag_names[i]);

  SpanSet spans;
  bool open = false;
  Span current;
  auto close = [&] {
    if (open) spans.insert(current);
    open = false;
  };
  for (std::size_t t = 0; t < labels.size(); ++t) {
    const int id = labels[t];
    if (id < 0 || static_cast<std::size_t>(id) >= tags.size())
      throw ValidationError("label id out of range of tag_names");
    const detail::TagInfo& tag = tags[static_cast<std::size_t>(id)];
    if (tag.is_o) {
      close();
    } else if (tag.is_b || !open || current.type != tag.type) {
      close();
      current = Span{tag.type, t, t};
      open = true;
    } else {
      current.end = t;  // same-type I continues the open span
    }
  }
  close();
  return spans;
}

// Inverse of extract_spans for non-overlapping span sets; used by round-trip
// checks and synthetic tooling. tag_names must contain B-/I- tags for every
// span type present.
inline std::vector<int> encode_spans(const SpanSet& spans, std::size_t length,
                                     const std::vector<std::string>& tag_names) {
  std::vector<int> labels(length, 0);
  auto tag_id = [&](const std::string& name) -> int {
    for (std::size_t i = 0; i < tag_names.size(); ++i)
      if (tag_names[i] == name) return static_cast<int>(i);
    throw ValidationError("tag_names is missing tag: " + name);
  };
  std::size_t last_end = 0;
  bool any = false;
  for (const Span& span : spans) {
    if (span.start > span.end || span.end >= length)
      throw ValidationError("span out of range");
    if (any && span.start <= last_end)
      throw ValidationError("encode_spans requires non-overlapping spans");
    labels[span.start] = tag_id("B-" + span.type);
    const int inside = tag_id("I-" + span.type);
    for (std::size_t t = span.start + 1; t <= span.end; ++t) labels[t] = inside;
    last_end = span.end;
    any = true;
  }
  return labels;
}

struct F1Result {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t matched = 0;
  std::size_t predicted = 0;
  std::size_t referenced = 0;
};

// Micro-averaged entity F1 over all documents jointly. A predicted span
// counts as a match iff its (type, start, end) triple appears in the same
// document's reference spans. Zero denominators yield 0, never NaN.
inline F1Result entity_f1(const std::vector<std::vector<int>>& predictions,
                          const std::vector<std::vector<int>>& references,
                          const std::vector<std::string>& tag_names) {
  if (predictions.size() != references.size())
    throw ValidationError("entity_f1: prediction/reference counts differ");
  F1Result r;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i].size() != references[i].size())
      throw ValidationError("entity_f1: length mismatch in document " + std::to_string(i));
    const SpanSet pred = extract_spans(predictions[i], tag_names);
    const SpanSet ref = extract_spans(references[i], tag_names);
    r.predicted += pred.size();
    r.referenced += ref.size();
    for (const Span& span : pred) r.matched += ref.count(span);
  }
  r.precision = r.predicted == 0 ? 0.0
                                 : static_cast<double>(r.matched) / static_cast<double>(r.predicted);
  r.recall = r.referenced == 0 ? 0.0
                               : static_cast<double>(r.matched) / static_cast<double>(r.referenced);
  r.f1 = (r.precision + r.recall) == 0.0
             ? 0.0
             : 2.0 * r.precision * r.recall / (r.precision + r.recall);
  return r;
}

}  // namespace dpfed
