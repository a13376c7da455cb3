#include <iostream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "rat/cli.hpp"

int main(int argc, char** argv) {
#if defined(__GLIBC__)
    // Activation buffers are large and short-lived; keep them on the heap instead of
    // paying an mmap/munmap pair per tensor.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
    std::vector<std::string> args(argv + 1, argv + argc);
    return rat::run_cli(args, std::cout, std::cerr);
}
