#include <cstdio>

int main() {
  std::puts("gwreg: CLI not wired up yet");
  return 0;
}
