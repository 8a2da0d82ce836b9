// Writes the service's OpenAPI document to the given path, or stdout.

#include <fstream>
#include <iostream>

#include "zcbm/service.hpp"

int main(int argc, char** argv) {
  const std::string doc = zcbm::openapi_document().dump(2) + "\n";
  if (argc < 2) {
    std::cout << doc;
    return 0;
  }
  std::ofstream out(argv[1], std::ios::binary | std::ios::trunc);
  if (!out) {
    std::cerr << "cannot write " << argv[1] << "\n";
    return 1;
  }
  out << doc;
  return out ? 0 : 1;
}
