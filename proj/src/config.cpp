// populated later in the build
