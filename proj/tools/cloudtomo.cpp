#include <cstdio>

int main() {
  std::puts("cloudtomo: subcommands not wired yet");
  return 1;
}
