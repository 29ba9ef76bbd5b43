#include <iostream>

#include "app/app.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return gridlearn::app::run(args, gridlearn::app::process_env(), std::cout, std::cerr);
}
