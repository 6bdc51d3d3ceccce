#include <malloc.h>

#include "cocktail/cli.hpp"

int main(int argc, char** argv) {
  // Activation buffers are freed and reallocated on every step; keeping them on the
  // heap instead of mmap avoids page-fault churn.
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  return cocktail::dispatch(argc, argv);
}
