#include <cstdio>

int main() {
  std::puts("mctn: command-line interface not wired yet");
  return 1;
}
