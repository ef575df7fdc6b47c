// Scoring backend over a synthetic reference model, speaking the line
// protocol on stdin/stdout. Stands in for a real-model scorer in tests.

#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "rankaudit/protocol.hpp"
#include "rankaudit/simlab.hpp"

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: rankaudit-synthetic-scorer MODEL.json\n";
    return 2;
  }
  std::optional<rankaudit::SyntheticScoringBackend> backend;
  try {
    std::ifstream in(argv[1]);
    if (!in) throw std::runtime_error(std::string("cannot open ") + argv[1]);
    backend.emplace(rankaudit::model_from_json(nlohmann::json::parse(in)));
  } catch (const std::exception& e) {
    std::cerr << "rankaudit-synthetic-scorer: " << e.what() << "\n";
    return 1;
  }
  std::string line;
  while (std::getline(std::cin, line)) {
    try {
      const auto request = rankaudit::protocol::decode_request(line);
      std::cout << rankaudit::protocol::encode_response(backend->score(request.prompt, request.response));
    } catch (const std::exception& e) {
      std::cout << rankaudit::protocol::encode_error(e.what());
    }
    std::cout << std::flush;
  }
  return 0;
}
