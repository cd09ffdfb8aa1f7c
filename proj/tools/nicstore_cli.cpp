#include <cstdio>

int main() {
  std::puts("nicstore: cli wiring pending");
  return 0;
}
