#include "shapesig/pipeline.hpp"

int main(int argc, char** argv) {
  return shapesig::cli(argc, const_cast<const char* const*>(argv));
}
