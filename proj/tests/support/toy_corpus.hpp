#pragma once

#include <string>
#include <vector>

#include "stagecap/vocab.hpp"

namespace test {

/// Five scenes with two or three references each and one candidate per scene,
/// chosen so every n-gram order has hits, misses and repeated words.
struct ToyCorpus {
  std::vector<stagecap::Words> candidates;
  std::vector<std::vector<stagecap::Words>> references;
  std::vector<stagecap::Words> training;
};

inline stagecap::Words words(const std::string& s) {
  return stagecap::tokenize(s, SIZE_MAX);
}

inline ToyCorpus toy_corpus() {
  ToyCorpus t;
  t.candidates = {words("a red dog runs on the grass"),
                  words("two birds sit on a wire"),
                  words("the cat the cat sleeps"),
                  words("a man rides a horse on the beach"),
                  words("boats float")};
  t.references = {
      {words("a red dog runs on the green grass"),
       words("a dog is running on grass")},
      {words("two small birds sit on a wire"), words("birds on a power line"),
       words("two birds perched on a wire")},
      {words("a cat sleeps on the sofa"), words("the cat is asleep")},
      {words("a man riding a horse along the beach"),
       words("a person rides a brown horse on the sand")},
      {words("several boats float in the harbor"),
       words("boats in a calm harbor"), words("boats floating on water")}};
  t.training = {words("a red dog runs on the grass"), words("the cat sleeps"),
                words("boats float on water")};
  return t;
}

}  // namespace test
