#include <iostream>

#include "toy_fixture.hpp"

int main() {
  try {
    pointca::test::toy_completion();
    pointca::test::toy_classifier();
  } catch (const std::exception& e) {
    std::cerr << "fixture training failed: " << e.what() << "\n";
    return 1;
  }
  std::cout << "toy victims ready in " << pointca::test::cache_dir() << "\n";
  return 0;
}
