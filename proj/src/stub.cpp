// placeholder while the library is built up
