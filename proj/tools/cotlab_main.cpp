#include <cstdio>
int main(){ std::puts("wip"); }
