#include <cstdio>
int main() { std::puts("cmml: not wired up yet"); return 0; }
